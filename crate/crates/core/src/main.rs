fn main() {
    std::process::exit(poisonlab::cli::main_with(std::env::args_os()));
}

fn main() {
    std::process::exit(unimamba::cli::main_with(std::env::args_os()));
}

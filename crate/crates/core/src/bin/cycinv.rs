fn main() {
    std::process::exit(cycinv::cli::main_with(std::env::args_os()));
}

fn main() {
    std::process::exit(dmtci::cli::main_with_args(std::env::args_os()));
}

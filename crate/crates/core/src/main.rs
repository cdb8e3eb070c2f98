fn main() {
    std::process::exit(ipgo::cli::main_with_args(std::env::args_os()));
}

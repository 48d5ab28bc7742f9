fn main() {
    std::process::exit(metromodel::cli::main_with_args(std::env::args_os()));
}

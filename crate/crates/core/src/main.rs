fn main() {
    std::process::exit(flatcal::cli::main_with_args(std::env::args_os()));
}

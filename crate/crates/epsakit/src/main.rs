fn main() {
    std::process::exit(epsakit::cli::main_with(std::env::args_os()));
}

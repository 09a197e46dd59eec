fn main() {
    std::process::exit(trimodal::cli::main_with(std::env::args_os()));
}

fn main() {
    std::process::exit(narrmine::cli::run(std::env::args_os()));
}

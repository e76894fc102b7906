fn main() {
    std::process::exit(vivi_core::cli::run(std::env::args_os()));
}

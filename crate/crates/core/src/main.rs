fn main() {
    std::process::exit(cdg_core::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(mfbsde::cli::run_from(std::env::args_os()));
}

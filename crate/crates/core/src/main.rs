fn main() {
    std::process::exit(bcc_xai::cli::run(std::env::args_os()));
}

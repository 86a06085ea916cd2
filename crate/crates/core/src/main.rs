fn main() {
    std::process::exit(mldnn::cli::run_command(std::env::args_os()));
}

fn main() {
    std::process::exit(hvpl::cli::cli_main());
}

fn main() {
    std::process::exit(seqlabel::cli::run_cli());
}

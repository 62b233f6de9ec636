fn main() {
    std::process::exit(phylovar::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(lesiongraph::cli::run());
}

fn main() {
    std::process::exit(zoneopt::cli::run());
}

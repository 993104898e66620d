fn main() {
    std::process::exit(evoforecast::cli::run());
}

fn main() {
    std::process::exit(geocloak_cli::run(std::env::args()))
}

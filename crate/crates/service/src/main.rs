fn main() {
    std::process::exit(bridgelab_service::cli::run(std::env::args().collect()));
}

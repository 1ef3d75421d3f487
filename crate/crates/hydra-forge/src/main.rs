fn main() {
    std::process::exit(hydra_forge::cli_main(std::env::args()));
}

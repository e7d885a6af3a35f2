fn main() {
    std::process::exit(anisogauss::pipeline::cli_main());
}

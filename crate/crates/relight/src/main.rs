fn main() {
    std::process::exit(relight::cli_main());
}

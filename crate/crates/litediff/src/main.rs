fn main() {
    std::process::exit(litediff::run_cli());
}

fn main() {
    std::process::exit(mibci::cli_main());
}

fn main() {
    std::process::exit(fedmodal::cli::main());
}

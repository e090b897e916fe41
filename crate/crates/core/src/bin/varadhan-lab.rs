fn main() {
    std::process::exit(varadhan_lab::cli::main());
}

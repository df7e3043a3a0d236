fn main() {
    std::process::exit(cvmim::run());
}

fn main() {
    std::process::exit(exciter::cli::run());
}

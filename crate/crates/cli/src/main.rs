fn main() {
    std::process::exit(gik::run(std::env::args_os()).code());
}

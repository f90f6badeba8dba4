fn main() {
    std::process::exit(divtok::run(std::env::args_os()));
}

fn main() {
    std::process::exit(dexlab::run(std::env::args_os()));
}

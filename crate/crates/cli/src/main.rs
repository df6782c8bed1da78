fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(tcsan_cli::run(&args));
}

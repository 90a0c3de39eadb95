fn main() {
    if let Err(e) = qbert::run(std::env::args().skip(1).collect()) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

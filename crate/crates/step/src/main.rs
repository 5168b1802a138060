fn main() {
    let cli = step::cli::parse();
    if let Err(e) = step::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

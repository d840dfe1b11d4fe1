fn main() { std::process::exit(segcredit::cli::run()); }

fn main() { std::process::exit(echoalign::cli::run()); }

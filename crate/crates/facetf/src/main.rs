use facetf::cli;

fn main() {
    let filter = std::env::var("FACETF_LOG").unwrap_or_else(|_| "error".to_string());
    env_logger::Builder::new().parse_filters(&filter).format_timestamp(None).init();

    let args: Vec<String> = std::env::args().skip(1).collect();
    if let Err(e) = cli::run(&args) {
        eprintln!("facetf: {e}");
        std::process::exit(e.exit_code());
    }
}

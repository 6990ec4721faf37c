use clap::Parser;

fn main() {
    let cli = mharag_cli::Cli::parse();
    if let Err(e) = mharag_cli::run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

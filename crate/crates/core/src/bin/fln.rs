use clap::Parser;

fn main() {
    let cli = flexilength::cli::Cli::parse();
    match flexilength::cli::run(&cli) {
        Ok(msg) => println!("{msg}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}

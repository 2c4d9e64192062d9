use clap::Parser;

fn main() {
    let cli = slanc::cli::Cli::parse();
    match slanc::cli::run(cli) {
        Ok(out) => print!("{}", out.stdout),
        Err(e) => {
            eprintln!("slanc: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

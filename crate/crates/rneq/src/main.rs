use clap::Parser;
use rneq::cli;

fn main() {
    let parsed = match cli::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version are successful outcomes; anything else is usage
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = cli::run(&parsed) {
        eprintln!("error: {e}");
        std::process::exit(cli::exit_code(&e));
    }
}

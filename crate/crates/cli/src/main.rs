use clap::Parser;

fn main() {
    let cli = xt2t_cli::Cli::parse();
    if let Err(e) = xt2t_cli::run(cli) {
        let msg = e.to_string().replace('\n', " ");
        eprintln!("error[{}]: {msg}", e.category());
        std::process::exit(1);
    }
}

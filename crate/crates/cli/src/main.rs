use s2wat_cli::cli;

fn main() {
    let argv: Vec<String> = std::env::args().collect();
    let seed = cli::env_seed();
    let code = cli::run(&argv, seed.as_deref(), &mut std::io::stdout(), &mut std::io::stderr());
    std::process::exit(code);
}

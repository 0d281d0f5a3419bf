use std::io::IsTerminal;

fn main() {
    let stdin = std::io::stdin();
    let interactive = stdin.is_terminal();
    let mut input = stdin.lock();
    let mut out = std::io::stdout().lock();
    let mut err = std::io::stderr().lock();
    let code = ndb_cli::run(
        std::env::args_os(),
        &mut ndb_cli::Io {
            input: &mut input,
            out: &mut out,
            err: &mut err,
            interactive,
        },
    );
    std::process::exit(code);
}

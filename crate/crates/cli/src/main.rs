use std::process::ExitCode;

use datastage_cli::{main_with, Io};

#[tokio::main]
async fn main() -> ExitCode {
    let env: Vec<(String, String)> = std::env::vars().collect();
    let (mut out, mut err) = (std::io::stdout(), std::io::stderr());
    let mut io = Io {
        out: &mut out,
        err: &mut err,
    };
    let exit = main_with(std::env::args().collect(), &env, &mut io).await;
    ExitCode::from(exit.code() as u8)
}

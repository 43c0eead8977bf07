use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;
use skillchain_service::cli::{self, Cli, CliError, Command};
use skillchain_service::router;

fn serve(host: &str, port: u16, state: skillchain_service::AppState) -> Result<(), CliError> {
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((host, port)).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(Arc::new(state))).await
    })?;
    Ok(())
}

fn main() -> ExitCode {
    let args = Cli::parse();
    let result = match args.command {
        Command::Serve { port, host, library, task, models, ack } => {
            cli::serve_state(&library, task.as_deref(), &models, &ack).and_then(|s| serve(&host, port, s))
        }
        cmd => cli::run(cmd, &mut std::io::stdout().lock(), &mut std::io::stderr().lock()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

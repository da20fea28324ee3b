use std::process::ExitCode;

use spectrafact::cli;

fn main() -> ExitCode {
    let code = match cli::parse_config(std::env::args_os()) {
        Ok(cfg) => {
            let report = cli::run(&cfg);
            if let Some(summary) = &report.summary {
                println!("{}", serde_json::to_string_pretty(summary).expect("summary serializes"));
            }
            if let (Some(stage), Some(msg)) = (&report.stage, &report.message) {
                eprintln!("error [{stage}]: {msg}");
            }
            report.code
        }
        Err(e) if e.code == cli::EXIT_OK => {
            print!("{}", e.message);
            e.code
        }
        Err(e) => {
            eprint!("{}", e.message);
            if !e.message.ends_with('\n') {
                eprintln!();
            }
            e.code
        }
    };
    ExitCode::from(code as u8)
}

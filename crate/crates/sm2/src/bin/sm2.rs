use sm2::cli::{self, CliError};

fn panic_message(payload: &dyn std::any::Any) -> &str {
    payload
        .downcast_ref::<String>()
        .map(String::as_str)
        .or_else(|| payload.downcast_ref::<&str>().copied())
        .unwrap_or("panic")
}

fn main() {
    // The stderr JSON line is the error report, so the hook stays quiet: no
    // default backtrace spew, and a consumer closing stdout early
    // (`sm2 ... | head`) is not an error at all. RUST_BACKTRACE still works.
    let backtraces = std::env::var("RUST_BACKTRACE").is_ok_and(|v| v != "0");
    std::panic::set_hook(Box::new(move |info| {
        if panic_message(info.payload()).contains("Broken pipe") {
            return;
        }
        if backtraces {
            eprintln!("{info}");
            eprintln!("{}", std::backtrace::Backtrace::force_capture());
        }
    }));
    // Panics (non-finite guards and the like) count as runtime faults:
    // exit 2 with the same machine-parseable stderr line as typed errors.
    let result = std::panic::catch_unwind(|| cli::run(std::env::args_os()));
    let code = match result {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            eprintln!("{}", e.stderr_line());
            e.exit_code()
        }
        Err(panic) => {
            let msg = panic_message(panic.as_ref());
            if msg.contains("Broken pipe") {
                std::process::exit(0);
            }
            let e = CliError::Runtime(msg.to_string());
            eprintln!("{}", e.stderr_line());
            e.exit_code()
        }
    };
    std::process::exit(code);
}

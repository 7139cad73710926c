use icx::error::Error;

fn main() {
    // Die quietly on a closed pipe (`icx sweep ... | head`) the way other
    // line-oriented tools do, instead of panicking mid-print.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    if let Err(err) = icx::cli::run() {
        eprintln!("error: {err}");
        if let Error::Capacity { what, limit, .. } = &err {
            eprintln!(
                "hint: this model handles at most {limit} for {what}; \
                 shrink the dataset or train with a larger capacity"
            );
        }
        std::process::exit(err.exit_code());
    }
}

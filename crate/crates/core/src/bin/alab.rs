fn main() {
    // Dying quietly when a downstream pager closes the pipe is normal
    // CLI behavior; Rust's default turns it into a panic.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    std::process::exit(adapterlab::cli::main());
}

//! Support code for the `rtdetr` command-line tool: image loading, the
//! inference session, detection output, shape tracing, kernel self-tests
//! and latency benchmarks.

pub mod bench;
pub mod exit;
pub mod output;
pub mod preprocess;
pub mod selftest;
pub mod session;
pub mod shapes;

pub use exit::{exit_code, ExitCode};
pub use preprocess::{preprocess_image, PreparedImage};
pub use session::Session;
pub use shapes::{expected_shapes, trace_shapes, ShapeReport, TraceOptions};

/// Runs `f` on a dedicated rayon pool of `threads` workers (`None` uses
/// rayon's default sizing).
pub fn with_threads<R: Send>(
    threads: Option<usize>,
    f: impl FnOnce() -> R + Send,
) -> anyhow::Result<R> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        anyhow::ensure!(n > 0, "thread count must be positive");
        builder = builder.num_threads(n);
    }
    Ok(builder.build()?.install(f))
}

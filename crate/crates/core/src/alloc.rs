//! Allocator tuning for the training loop.
//!
//! Each step allocates and frees activation buffers of a few hundred KiB.
//! With glibc defaults those go through `mmap`/`munmap` and the heap top is
//! trimmed after every step, so page faults dominate the run time.

use std::sync::Once;

static TUNE: Once = Once::new();

/// Keeps large buffers on the heap and stops trimming. Idempotent.
pub fn tune_allocator() {
    TUNE.call_once(|| {
        #[cfg(all(target_os = "linux", target_env = "gnu"))]
        // SAFETY: mallopt only adjusts allocator parameters.
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 64 << 20);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 256 << 20);
            libc::mallopt(libc::M_TOP_PAD, 64 << 20);
        }
    });
}

//! Executable pages. Code is copied into a writable mapping that is then
//! flipped to read+execute, so no page is ever writable and executable.

use crate::error::{Error, Result};

#[derive(Debug)]
pub struct CodeBuffer {
    ptr: *mut u8,
    len: usize,
    map_len: usize,
}

// The mapping is immutable once built.
unsafe impl Send for CodeBuffer {}
unsafe impl Sync for CodeBuffer {}

impl CodeBuffer {
    #[cfg(unix)]
    pub fn new(code: &[u8]) -> Result<Self> {
        if code.is_empty() {
            return Err(Error::CodeBuffer("empty code".into()));
        }
        // SAFETY: sysconf has no preconditions.
        let page =
            usize::try_from(unsafe { libc::sysconf(libc::_SC_PAGESIZE) }).ok().filter(|&p| p > 0).unwrap_or(4096);
        let map_len = code.len().div_ceil(page) * page;
        // SAFETY: anonymous private mapping; the result is checked below.
        let ptr = unsafe {
            libc::mmap(
                std::ptr::null_mut(),
                map_len,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_PRIVATE | libc::MAP_ANONYMOUS,
                -1,
                0,
            )
        };
        if ptr == libc::MAP_FAILED {
            return Err(Error::CodeBuffer(format!("mmap: {}", std::io::Error::last_os_error())));
        }
        let ptr = ptr.cast::<u8>();
        let buf = Self { ptr, len: code.len(), map_len };
        // SAFETY: the mapping is at least `code.len()` writable bytes.
        unsafe {
            std::ptr::copy_nonoverlapping(code.as_ptr(), ptr, code.len());
            if libc::mprotect(ptr.cast(), map_len, libc::PROT_READ | libc::PROT_EXEC) != 0 {
                // `buf` unmaps on drop
                return Err(Error::CodeBuffer(format!("mprotect: {}", std::io::Error::last_os_error())));
            }
        }
        Ok(buf)
    }

    #[cfg(not(unix))]
    pub fn new(_code: &[u8]) -> Result<Self> {
        Err(Error::NativeUnsupported)
    }

    pub fn as_ptr(&self) -> *const u8 {
        self.ptr
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn bytes(&self) -> &[u8] {
        // SAFETY: the first `len` bytes were initialized and stay readable.
        unsafe { std::slice::from_raw_parts(self.ptr, self.len) }
    }
}

impl Drop for CodeBuffer {
    fn drop(&mut self) {
        #[cfg(unix)]
        // SAFETY: `ptr`/`map_len` describe a mapping this value owns.
        unsafe {
            libc::munmap(self.ptr.cast(), self.map_len);
        }
    }
}

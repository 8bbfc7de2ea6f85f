//! Cache-line-aligned `f64` buffers used for tape values and gradients.
//!
//! The vectorized kernels in [`crate::kernels`] rely on 64-byte alignment
//! for aligned and non-temporal stores, so every buffer that can reach them
//! is allocated through [`AVec`] instead of `Vec<f64>`. `AVec` dereferences
//! to `[f64]`, making it a drop-in replacement wherever slices are consumed.

use std::alloc::{alloc_zeroed, dealloc, handle_alloc_error, Layout};
use std::fmt;
use std::ops::{Deref, DerefMut};
use std::ptr::NonNull;

pub const ALIGN: usize = 64;

/// Fixed-length heap array of `f64` aligned to [`ALIGN`] bytes.
pub struct AVec {
    ptr: NonNull<f64>,
    len: usize,
}

impl AVec {
    /// A zero-initialized buffer of `n` elements.
    pub fn zeroed(n: usize) -> Self {
        if n == 0 {
            return Self { ptr: NonNull::dangling(), len: 0 };
        }
        let layout = Self::layout(n);
        let raw = unsafe { alloc_zeroed(layout) };
        let Some(ptr) = NonNull::new(raw as *mut f64) else {
            handle_alloc_error(layout);
        };
        Self { ptr, len: n }
    }

    /// A buffer holding a copy of `src`.
    pub fn from_slice(src: &[f64]) -> Self {
        let mut v = Self::zeroed(src.len());
        v.copy_from_slice(src);
        v
    }

    fn layout(n: usize) -> Layout {
        Layout::from_size_align(n * std::mem::size_of::<f64>(), ALIGN)
            .expect("buffer size overflows layout")
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_ptr(&self) -> *const f64 {
        self.ptr.as_ptr()
    }

    pub fn as_mut_ptr(&mut self) -> *mut f64 {
        self.ptr.as_ptr()
    }
}

impl Drop for AVec {
    fn drop(&mut self) {
        if self.len > 0 {
            unsafe { dealloc(self.ptr.as_ptr() as *mut u8, Self::layout(self.len)) };
        }
    }
}

impl Deref for AVec {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        unsafe { std::slice::from_raw_parts(self.ptr.as_ptr(), self.len) }
    }
}

impl DerefMut for AVec {
    fn deref_mut(&mut self) -> &mut [f64] {
        unsafe { std::slice::from_raw_parts_mut(self.ptr.as_ptr(), self.len) }
    }
}

impl Clone for AVec {
    fn clone(&self) -> Self {
        Self::from_slice(self)
    }
}

impl fmt::Debug for AVec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(&**self, f)
    }
}

impl<'a> IntoIterator for &'a AVec {
    type Item = &'a f64;
    type IntoIter = std::slice::Iter<'a, f64>;
    fn into_iter(self) -> Self::IntoIter {
        self.iter()
    }
}

impl<'a> IntoIterator for &'a mut AVec {
    type Item = &'a mut f64;
    type IntoIter = std::slice::IterMut<'a, f64>;
    fn into_iter(self) -> Self::IntoIter {
        self.iter_mut()
    }
}

unsafe impl Send for AVec {}
unsafe impl Sync for AVec {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffers_are_cache_line_aligned() {
        for n in [1, 7, 64, 1000, 184320] {
            let v = AVec::zeroed(n);
            assert_eq!(v.as_ptr() as usize % ALIGN, 0, "n={n}");
            assert_eq!(v.len(), n);
            assert!(v.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn round_trips_values() {
        let src: Vec<f64> = (0..97).map(|i| i as f64 * 0.5 - 3.0).collect();
        let mut v = AVec::from_slice(&src);
        assert_eq!(&v[..], &src[..]);
        v[3] = 42.0;
        assert_eq!(v[3], 42.0);
        let w = v.clone();
        assert_eq!(&w[..], &v[..]);
        assert_eq!(w.as_ptr() as usize % ALIGN, 0);
    }

    #[test]
    fn empty_buffer_is_safe() {
        let v = AVec::zeroed(0);
        assert!(v.is_empty());
        assert_eq!(v.iter().count(), 0);
    }
}

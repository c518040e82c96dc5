//! C ABI for the appearance-transfer library.
//!
//! All functions return an [`ApptransStatus`]; results are written through
//! out-pointers. Objects are opaque handles created and destroyed by this
//! library — never free them with `free(3)`. On any non-success status a
//! human-readable message is available from
//! [`apptrans_last_error_message`] until the next call on the same thread.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::path::Path;

use apptrans::colortransfer::{apply_transfer, load_tps, save_tps, TpsParams};
use apptrans::imaging::{load_png, save_png, ImageRgb, Mask};
use apptrans::metrics::{psnr_y, rmse, ssim};

/// Status codes returned by every FFI entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApptransStatus {
    /// Success.
    ApptransOk = 0,
    /// A pointer argument was null or a value was out of range.
    ApptransInvalidArgument = 1,
    /// File could not be read, written, decoded or parsed.
    ApptransIoError = 2,
    /// The operation is undefined for these inputs (size mismatch, empty).
    ApptransNumericError = 3,
}

use ApptransStatus::*;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<Vec<u8>>) {
    let c = CString::new(message).unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

/// Message describing the most recent failure on the calling thread, or an
/// empty string when the last call succeeded. The pointer stays valid until
/// the next FFI call on the same thread.
#[no_mangle]
pub extern "C" fn apptrans_last_error_message() -> *const c_char {
    thread_local! {
        static EMPTY: CString = CString::new("").unwrap();
    }
    LAST_ERROR.with(|slot| match &*slot.borrow() {
        Some(msg) => msg.as_ptr(),
        None => EMPTY.with(|e| e.as_ptr()),
    })
}

/// Opaque RGB image handle (32-bit float channels in [0,1]).
pub struct ApptransImage {
    image: ImageRgb,
    alpha: Option<Mask>,
}

/// Opaque handle to a fitted color-transfer spline.
pub struct ApptransTransfer {
    theta: TpsParams,
}

unsafe fn path_arg<'a>(raw: *const c_char) -> Result<&'a Path, ApptransStatus> {
    if raw.is_null() {
        set_error("path is null");
        return Err(ApptransInvalidArgument);
    }
    match unsafe { CStr::from_ptr(raw) }.to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(ApptransInvalidArgument)
        }
    }
}

macro_rules! nonnull {
    ($ptr:expr, $name:literal) => {
        if $ptr.is_null() {
            set_error(concat!($name, " is null"));
            return ApptransInvalidArgument;
        }
    };
}

/// Loads an RGB(A) PNG. On success writes a new handle to `out`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn apptrans_image_load_png(
    path: *const c_char,
    out: *mut *mut ApptransImage,
) -> ApptransStatus {
    clear_error();
    nonnull!(out, "out");
    let path = match unsafe { path_arg(path) } {
        Ok(p) => p,
        Err(s) => return s,
    };
    match load_png(path) {
        Ok((image, alpha)) => {
            unsafe { *out = Box::into_raw(Box::new(ApptransImage { image, alpha })) };
            ApptransOk
        }
        Err(e) => {
            set_error(e.to_string());
            ApptransIoError
        }
    }
}

/// Saves the image as an 8-bit RGB PNG.
///
/// # Safety
/// `image` must be a live handle; `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn apptrans_image_save_png(
    image: *const ApptransImage,
    path: *const c_char,
) -> ApptransStatus {
    clear_error();
    nonnull!(image, "image");
    let path = match unsafe { path_arg(path) } {
        Ok(p) => p,
        Err(s) => return s,
    };
    match save_png(&unsafe { &*image }.image, path) {
        Ok(()) => ApptransOk,
        Err(e) => {
            set_error(e.to_string());
            ApptransIoError
        }
    }
}

/// Image width in pixels; 0 for a null handle.
///
/// # Safety
/// `image` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn apptrans_image_width(image: *const ApptransImage) -> u32 {
    if image.is_null() {
        return 0;
    }
    unsafe { &*image }.image.width() as u32
}

/// Image height in pixels; 0 for a null handle.
///
/// # Safety
/// `image` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn apptrans_image_height(image: *const ApptransImage) -> u32 {
    if image.is_null() {
        return 0;
    }
    unsafe { &*image }.image.height() as u32
}

/// Releases an image handle. Null is ignored.
///
/// # Safety
/// `image` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn apptrans_image_free(image: *mut ApptransImage) {
    if !image.is_null() {
        drop(unsafe { Box::from_raw(image) });
    }
}

/// Loads a fitted transfer from its versioned text file.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn apptrans_transfer_load(
    path: *const c_char,
    out: *mut *mut ApptransTransfer,
) -> ApptransStatus {
    clear_error();
    nonnull!(out, "out");
    let path = match unsafe { path_arg(path) } {
        Ok(p) => p,
        Err(s) => return s,
    };
    match load_tps(path) {
        Ok(theta) => {
            unsafe { *out = Box::into_raw(Box::new(ApptransTransfer { theta })) };
            ApptransOk
        }
        Err(e) => {
            set_error(e.to_string());
            ApptransIoError
        }
    }
}

/// Writes the transfer to its versioned text form (round-trips bit-exactly).
///
/// # Safety
/// `transfer` must be a live handle; `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn apptrans_transfer_save(
    transfer: *const ApptransTransfer,
    path: *const c_char,
) -> ApptransStatus {
    clear_error();
    nonnull!(transfer, "transfer");
    let path = match unsafe { path_arg(path) } {
        Ok(p) => p,
        Err(s) => return s,
    };
    match save_tps(&unsafe { &*transfer }.theta, path) {
        Ok(()) => ApptransOk,
        Err(e) => {
            set_error(e.to_string());
            ApptransIoError
        }
    }
}

/// Releases a transfer handle. Null is ignored.
///
/// # Safety
/// `transfer` must be null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn apptrans_transfer_free(transfer: *mut ApptransTransfer) {
    if !transfer.is_null() {
        drop(unsafe { Box::from_raw(transfer) });
    }
}

/// Applies the transfer to every foreground pixel of `image` (the alpha
/// mask when the source PNG had one, every pixel otherwise) and writes a new
/// image handle to `out`.
///
/// # Safety
/// `transfer` and `image` must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn apptrans_transfer_apply(
    transfer: *const ApptransTransfer,
    image: *const ApptransImage,
    out: *mut *mut ApptransImage,
) -> ApptransStatus {
    clear_error();
    nonnull!(transfer, "transfer");
    nonnull!(image, "image");
    nonnull!(out, "out");
    let src = unsafe { &*image };
    let mask = src
        .alpha
        .clone()
        .unwrap_or_else(|| Mask::full(src.image.width(), src.image.height()));
    let corrected = apply_transfer(&unsafe { &*transfer }.theta, &src.image, &mask);
    unsafe {
        *out = Box::into_raw(Box::new(ApptransImage {
            image: corrected,
            alpha: src.alpha.clone(),
        }));
    }
    ApptransOk
}

macro_rules! metric_fn {
    ($(#[$doc:meta])* $name:ident, $metric:path) => {
        $(#[$doc])*
        ///
        /// # Safety
        /// `a` and `b` must be live handles and `out` a valid pointer.
        #[no_mangle]
        pub unsafe extern "C" fn $name(
            a: *const ApptransImage,
            b: *const ApptransImage,
            out: *mut f64,
        ) -> ApptransStatus {
            clear_error();
            nonnull!(a, "a");
            nonnull!(b, "b");
            nonnull!(out, "out");
            match $metric(&unsafe { &*a }.image, &unsafe { &*b }.image) {
                Ok(v) => {
                    unsafe { *out = v };
                    ApptransOk
                }
                Err(e) => {
                    set_error(e.to_string());
                    ApptransNumericError
                }
            }
        }
    };
}

metric_fn!(
    /// Luma PSNR in dB; +infinity for identical images.
    apptrans_psnr_y,
    psnr_y
);
metric_fn!(
    /// Mean SSIM over an 11x11 Gaussian window on luma.
    apptrans_ssim,
    ssim
);
metric_fn!(
    /// Root-mean-square error over all channels.
    apptrans_rmse,
    rmse
);

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;
    use std::ptr;

    fn c_path(p: &Path) -> CString {
        CString::new(p.to_str().unwrap()).unwrap()
    }

    #[test]
    fn image_round_trip_and_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let png = dir.path().join("img.png");
        let img = ImageRgb::from_fn(16, 16, |x, y| {
            [x as f32 / 16.0, y as f32 / 16.0, 0.5]
        });
        save_png(&img, &png).unwrap();

        let mut handle: *mut ApptransImage = ptr::null_mut();
        let status = unsafe { apptrans_image_load_png(c_path(&png).as_ptr(), &mut handle) };
        assert_eq!(status, ApptransOk);
        assert_eq!(unsafe { apptrans_image_width(handle) }, 16);
        assert_eq!(unsafe { apptrans_image_height(handle) }, 16);

        let mut v = 0.0f64;
        assert_eq!(unsafe { apptrans_psnr_y(handle, handle, &mut v) }, ApptransOk);
        assert!(v.is_infinite());
        assert_eq!(unsafe { apptrans_ssim(handle, handle, &mut v) }, ApptransOk);
        assert!((v - 1.0).abs() < 1e-9);
        assert_eq!(unsafe { apptrans_rmse(handle, handle, &mut v) }, ApptransOk);
        assert_eq!(v, 0.0);

        let out_png = dir.path().join("copy.png");
        assert_eq!(
            unsafe { apptrans_image_save_png(handle, c_path(&out_png).as_ptr()) },
            ApptransOk
        );
        assert!(out_png.is_file());
        unsafe { apptrans_image_free(handle) };
    }

    #[test]
    fn transfer_round_trip_and_apply() {
        let dir = tempfile::tempdir().unwrap();
        let tps = dir.path().join("identity.tps");
        let theta = TpsParams::identity(vec![nalgebra::Vector3::new(0.5, 0.5, 0.5)]);
        save_tps(&theta, &tps).unwrap();

        let mut t: *mut ApptransTransfer = ptr::null_mut();
        assert_eq!(
            unsafe { apptrans_transfer_load(c_path(&tps).as_ptr(), &mut t) },
            ApptransOk
        );
        let tps2 = dir.path().join("copy.tps");
        assert_eq!(
            unsafe { apptrans_transfer_save(t, c_path(&tps2).as_ptr()) },
            ApptransOk
        );
        assert_eq!(
            std::fs::read_to_string(&tps).unwrap(),
            std::fs::read_to_string(&tps2).unwrap()
        );

        let png = dir.path().join("img.png");
        save_png(&ImageRgb::filled(4, 4, [0.25, 0.5, 0.75]), &png).unwrap();
        let mut img: *mut ApptransImage = ptr::null_mut();
        unsafe { apptrans_image_load_png(c_path(&png).as_ptr(), &mut img) };
        let mut out: *mut ApptransImage = ptr::null_mut();
        assert_eq!(
            unsafe { apptrans_transfer_apply(t, img, &mut out) },
            ApptransOk
        );
        // identity transfer: same pixels
        let mut v = 1.0f64;
        assert_eq!(unsafe { apptrans_rmse(img, out, &mut v) }, ApptransOk);
        assert_eq!(v, 0.0);
        unsafe {
            apptrans_image_free(img);
            apptrans_image_free(out);
            apptrans_transfer_free(t);
        }
    }

    #[test]
    fn errors_set_message_and_status() {
        let mut handle: *mut ApptransImage = ptr::null_mut();
        let missing = CString::new("/definitely/not/here.png").unwrap();
        let status = unsafe { apptrans_image_load_png(missing.as_ptr(), &mut handle) };
        assert_eq!(status, ApptransIoError);
        let msg = unsafe { CStr::from_ptr(apptrans_last_error_message()) };
        assert!(!msg.to_bytes().is_empty());

        let status = unsafe { apptrans_image_load_png(ptr::null(), &mut handle) };
        assert_eq!(status, ApptransInvalidArgument);
        // success clears the message
        let mut v = 0.0;
        let img = ImageRgb::filled(2, 2, [0.1, 0.2, 0.3]);
        let a = Box::into_raw(Box::new(ApptransImage {
            image: img,
            alpha: None,
        }));
        assert_eq!(unsafe { apptrans_rmse(a, a, &mut v) }, ApptransOk);
        let msg = unsafe { CStr::from_ptr(apptrans_last_error_message()) };
        assert!(msg.to_bytes().is_empty());
        unsafe { apptrans_image_free(a) };
    }
}

//! C ABI over `flash_abft`.
//!
//! Matrices cross the boundary as opaque `FabftMatrix` handles owned by the
//! caller and released with `fabft_matrix_free`. Every fallible call returns
//! a `FabftStatus`; on failure `fabft_last_error` describes the problem for
//! the calling thread. Strings returned through out-parameters are
//! allocated here and must be released with `fabft_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use flash_abft::abft::{self, Category};
use flash_abft::attention::{self, KernelConfig};
use flash_abft::campaign::{self, CampaignConfig};
use flash_abft::fault::{self, FaultSpec};
use flash_abft::matrix::{Matrix, Role};
use flash_abft::numerics::{self, Format, PrecisionPolicy};
use flash_abft::schedule;
use flash_abft::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FabftStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    InvalidFault = 4,
    Config = 5,
    Io = 6,
    Parse = 7,
    Internal = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FabftCategory {
    Detected = 0,
    FalsePositive = 1,
    Silent = 2,
    Masked = 3,
}

impl From<Category> for FabftCategory {
    fn from(c: Category) -> Self {
        match c {
            Category::Detected => FabftCategory::Detected,
            Category::FalsePositive => FabftCategory::FalsePositive,
            Category::Silent => FabftCategory::Silent,
            Category::Masked => FabftCategory::Masked,
        }
    }
}

/// Kernel shape comes from the operands; these are the remaining knobs.
/// Format codes: 1 bf16, 2 fp32, 3 fp64.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct FabftKernelOptions {
    pub block_size: usize,
    pub datapath: u16,
    pub output_accum: u16,
    pub stats: u16,
    pub flush_subnormals: bool,
    pub scale_scores: bool,
}

/// Opaque matrix handle.
pub struct FabftMatrix(Matrix);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn fail(status: FabftStatus, msg: impl Into<String>) -> FabftStatus {
    set_error(msg);
    status
}

fn from_error(e: Error) -> FabftStatus {
    let status = match &e {
        Error::BitIndex { .. } => FabftStatus::InvalidArgument,
        Error::Dimension(_) => FabftStatus::Dimension,
        Error::InvalidFault(_) => FabftStatus::InvalidFault,
        Error::Config(_) => FabftStatus::Config,
        Error::MatrixFile(_) | Error::Io(_) | Error::Csv(_) => FabftStatus::Io,
        Error::Json(_) => FabftStatus::Parse,
    };
    fail(status, e.to_string())
}

/// Runs `f`, turning panics into `Internal`.
fn guard(f: impl FnOnce() -> Result<(), FabftStatus>) -> FabftStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FabftStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => fail(FabftStatus::Internal, "panic inside flash-abft"),
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, FabftStatus> {
    p.as_ref()
        .ok_or_else(|| fail(FabftStatus::NullPointer, format!("{what} is NULL")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, FabftStatus> {
    p.as_mut()
        .ok_or_else(|| fail(FabftStatus::NullPointer, format!("{what} is NULL")))
}

unsafe fn string_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, FabftStatus> {
    if p.is_null() {
        return Err(fail(FabftStatus::NullPointer, format!("{what} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(FabftStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn format_arg(code: u16) -> Result<Format, FabftStatus> {
    Format::from_code(code)
        .ok_or_else(|| fail(FabftStatus::InvalidArgument, format!("unknown format code {code}")))
}

fn policy(opts: &FabftKernelOptions) -> Result<PrecisionPolicy, FabftStatus> {
    Ok(PrecisionPolicy {
        datapath: format_arg(opts.datapath)?,
        output_accum: format_arg(opts.output_accum)?,
        stats: format_arg(opts.stats)?,
        flush_subnormals: opts.flush_subnormals,
    })
}

fn kernel_config(q: &Matrix, k: &Matrix, opts: &FabftKernelOptions) -> Result<KernelConfig, FabftStatus> {
    Ok(KernelConfig::for_inputs(q, k)
        .with_block_size(opts.block_size)
        .with_precision(policy(opts)?)
        .with_scaled_scores(opts.scale_scores))
}

fn into_handle(m: Matrix) -> *mut FabftMatrix {
    Box::into_raw(Box::new(FabftMatrix(m)))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s).expect("no interior NUL").into_raw()
}

/// Message for the last failed call on this thread, or NULL. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fabft_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Static version string.
#[no_mangle]
pub extern "C" fn fabft_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Default options: 16 lanes, bf16 datapath, fp32 output accumulators.
#[no_mangle]
pub extern "C" fn fabft_default_options() -> FabftKernelOptions {
    let p = PrecisionPolicy::bf16();
    FabftKernelOptions {
        block_size: 16,
        datapath: p.datapath.code(),
        output_accum: p.output_accum.code(),
        stats: p.stats.code(),
        flush_subnormals: p.flush_subnormals,
        scale_scores: false,
    }
}

/// Copies `rows * cols` row-major values into a new matrix.
///
/// # Safety
/// `data` must point to `rows * cols` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fabft_matrix_new(
    rows: usize,
    cols: usize,
    data: *const f64,
    out: *mut *mut FabftMatrix,
) -> FabftStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| fail(FabftStatus::InvalidArgument, "rows * cols overflows"))?;
        let values = if len == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(deref(data, "data")?, len).to_vec()
        };
        let m = Matrix::new(rows, cols, values, Role::Q).map_err(from_error)?;
        *out = into_handle(m);
        Ok(())
    })
}

/// # Safety
/// `m` must be NULL or a handle from this library that is not used again.
#[no_mangle]
pub unsafe extern "C" fn fabft_matrix_free(m: *mut FabftMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// # Safety
/// `m` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn fabft_matrix_rows(m: *const FabftMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.0.rows())
}

/// # Safety
/// `m` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn fabft_matrix_cols(m: *const FabftMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.0.cols())
}

/// Copies the row-major contents into `out`, which holds `len` doubles.
///
/// # Safety
/// `m` must be a live handle and `out` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn fabft_matrix_copy_data(m: *const FabftMatrix, out: *mut f64, len: usize) -> FabftStatus {
    guard(|| {
        let m = &deref(m, "matrix")?.0;
        let data = m.data();
        if len != data.len() {
            return Err(fail(
                FabftStatus::Dimension,
                format!("buffer holds {len} values, matrix has {}", data.len()),
            ));
        }
        if len > 0 {
            std::slice::from_raw_parts_mut(out_ptr(out, "out")?, len).copy_from_slice(data);
        }
        Ok(())
    })
}

/// Reads a FABFT1 matrix file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fabft_matrix_read(path: *const c_char, out: *mut *mut FabftMatrix) -> FabftStatus {
    guard(|| {
        let path = string_arg(path, "path")?;
        let out = out_ptr(out, "out")?;
        let (m, _) = flash_abft::io::read_matrix(path, Role::Q).map_err(from_error)?;
        *out = into_handle(m);
        Ok(())
    })
}

/// Writes a FABFT1 matrix file with elements in `format_code`.
///
/// # Safety
/// `m` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fabft_matrix_write(m: *const FabftMatrix, path: *const c_char, format_code: u16) -> FabftStatus {
    guard(|| {
        let m = &deref(m, "matrix")?.0;
        let path = string_arg(path, "path")?;
        let format = format_arg(format_code)?;
        flash_abft::io::write_matrix(path, m, format).map_err(from_error)
    })
}

/// Nearest bf16 value (ties to even).
#[no_mangle]
pub extern "C" fn fabft_round_bf16(x: f64) -> f64 {
    numerics::round_to_bf16(x).to_f64()
}

#[no_mangle]
pub extern "C" fn fabft_round_bf16_bits(x: f64) -> u16 {
    numerics::round_to_bf16(x).to_bits()
}

type Kernel = fn(&Matrix, &Matrix, &Matrix, &KernelConfig) -> flash_abft::Result<Matrix>;

unsafe fn run_kernel(
    q: *const FabftMatrix,
    k: *const FabftMatrix,
    v: *const FabftMatrix,
    opts: *const FabftKernelOptions,
    out: *mut *mut FabftMatrix,
    kernel: Kernel,
) -> FabftStatus {
    guard(|| {
        let (q, k, v) = (&deref(q, "q")?.0, &deref(k, "k")?.0, &deref(v, "v")?.0);
        let cfg = kernel_config(q, k, deref(opts, "options")?)?;
        let out = out_ptr(out, "out")?;
        *out = into_handle(kernel(q, k, v, &cfg).map_err(from_error)?);
        Ok(())
    })
}

/// Dense fp64 softmax(QK^T)V.
///
/// # Safety
/// All handles must be live; `opts` readable; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fabft_reference_attention(
    q: *const FabftMatrix,
    k: *const FabftMatrix,
    v: *const FabftMatrix,
    opts: *const FabftKernelOptions,
    out: *mut *mut FabftMatrix,
) -> FabftStatus {
    run_kernel(q, k, v, opts, out, attention::reference_attention)
}

/// Blocked FlashAttention-2 schedule without the checker.
///
/// # Safety
/// All handles must be live; `opts` readable; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fabft_flash_attention(
    q: *const FabftMatrix,
    k: *const FabftMatrix,
    v: *const FabftMatrix,
    opts: *const FabftKernelOptions,
    out: *mut *mut FabftMatrix,
) -> FabftStatus {
    run_kernel(q, k, v, opts, out, |q, k, v, cfg| schedule::run_block_schedule(q, k, v, cfg, None))
}

/// FlashAttention-2 with the fused checksum; writes the output and the
/// predicted checksum.
///
/// # Safety
/// All handles must be live; `opts` readable; `out` and `predicted` writable.
#[no_mangle]
pub unsafe extern "C" fn fabft_fused_attention(
    q: *const FabftMatrix,
    k: *const FabftMatrix,
    v: *const FabftMatrix,
    opts: *const FabftKernelOptions,
    out: *mut *mut FabftMatrix,
    predicted: *mut f64,
) -> FabftStatus {
    guard(|| {
        let (q, k, v) = (&deref(q, "q")?.0, &deref(k, "k")?.0, &deref(v, "v")?.0);
        let cfg = kernel_config(q, k, deref(opts, "options")?)?;
        let out = out_ptr(out, "out")?;
        let predicted = out_ptr(predicted, "predicted")?;
        let run = abft::fused_kernel(q, k, v, &cfg, None).map_err(from_error)?;
        *predicted = run.predicted;
        *out = into_handle(run.output);
        Ok(())
    })
}

/// Sum of every element of `o`.
///
/// # Safety
/// `o` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fabft_actual_checksum(o: *const FabftMatrix, out: *mut f64) -> FabftStatus {
    guard(|| {
        *out_ptr(out, "out")? = abft::actual_checksum(&deref(o, "o")?.0);
        Ok(())
    })
}

/// True when the checker raises a flag.
#[no_mangle]
pub extern "C" fn fabft_compare(predicted: f64, actual: f64, tolerance: f64, nan_aware: bool) -> bool {
    abft::compare(predicted, actual, tolerance, nan_aware)
}

unsafe fn campaign_config(json: *const c_char) -> Result<CampaignConfig, FabftStatus> {
    let text = string_arg(json, "config_json")?;
    serde_json::from_str(text).map_err(|e| fail(FabftStatus::Parse, format!("bad campaign config: {e}")))
}

/// Calibrated tolerance for a JSON campaign config.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `tolerance` writable.
#[no_mangle]
pub unsafe extern "C" fn fabft_calibrate_tolerance(
    config_json: *const c_char,
    num_trials: usize,
    tolerance: *mut f64,
) -> FabftStatus {
    guard(|| {
        let cfg = campaign_config(config_json)?;
        let tolerance = out_ptr(tolerance, "tolerance")?;
        *tolerance = campaign::calibrate_tolerance(&cfg, num_trials)
            .map_err(from_error)?
            .tolerance;
        Ok(())
    })
}

/// Runs the campaigns described by a JSON config and returns the report as
/// JSON.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `report_json` writable.
#[no_mangle]
pub unsafe extern "C" fn fabft_run_campaigns(config_json: *const c_char, report_json: *mut *mut c_char) -> FabftStatus {
    guard(|| {
        let cfg = campaign_config(config_json)?;
        let report_json = out_ptr(report_json, "report_json")?;
        let (q, k, v) = campaign::load_inputs(&cfg).map_err(from_error)?;
        let report = campaign::run_campaigns(&cfg, &q, &k, &v).map_err(from_error)?;
        *report_json = into_c_string(report.to_json());
        Ok(())
    })
}

/// Replays a JSON fault list (one object or an array) and classifies it.
///
/// # Safety
/// All handles must be live; `faults_json` NUL-terminated; `category`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn fabft_inject(
    q: *const FabftMatrix,
    k: *const FabftMatrix,
    v: *const FabftMatrix,
    opts: *const FabftKernelOptions,
    faults_json: *const c_char,
    tolerance: f64,
    nan_aware: bool,
    category: *mut FabftCategory,
) -> FabftStatus {
    guard(|| {
        let (q, k, v) = (&deref(q, "q")?.0, &deref(k, "k")?.0, &deref(v, "v")?.0);
        let cfg = kernel_config(q, k, deref(opts, "options")?)?;
        let text = string_arg(faults_json, "faults_json")?;
        let faults: Vec<FaultSpec> = match serde_json::from_str::<Vec<FaultSpec>>(text) {
            Ok(list) => list,
            Err(_) => vec![serde_json::from_str::<FaultSpec>(text)
                .map_err(|e| fail(FabftStatus::Parse, format!("bad fault spec: {e}")))?],
        };
        let category = out_ptr(category, "category")?;
        let golden = abft::fused_kernel(q, k, v, &cfg, None).map_err(from_error)?;
        let faulty = fault::run_with_faults(q, k, v, &cfg, &faults).map_err(from_error)?;
        *category = fault::evaluate(&golden.output, &faulty, tolerance, nan_aware)
            .verdict
            .category
            .into();
        Ok(())
    })
}

/// # Safety
/// `s` must be NULL or a string returned by this library, not used again.
#[no_mangle]
pub unsafe extern "C" fn fabft_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

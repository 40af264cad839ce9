//! C ABI over the certification core: sample sizes, latent MDP loading,
//! Lipschitz constants, certificate assembly and PRISM export.
//!
//! Every fallible function returns a [`BcStatus`]; on failure the message is
//! available from [`bc_last_error_message`] on the same thread. Objects are
//! opaque handles released with their `_free` function. Strings returned
//! through `char **` are owned by the caller and released with
//! [`bc_string_free`].

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use bisimcert::checker::prism::export_prism;
use bisimcert::checker::{lipschitz_constants, LatentMc, LipschitzConstants};
use bisimcert::latent::{LatentMdp, LatentPolicy};
use bisimcert::pac::{
    assemble_certificate, required_samples_loss, required_samples_value, CertificateReport, LossEstimate, PacParams,
};
use bisimcert::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    UnsupportedPair = 4,
    InsufficientSamples = 5,
    Io = 6,
    Panic = 7,
    Other = 8,
}

/// Lipschitz constants of a latent chain under the discrete metric.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BcLipschitz {
    pub kr: f64,
    pub kp: f64,
    pub kv: f64,
    pub rmax: f64,
}

/// Opaque latent MDP handle.
pub struct BcLatentMdp {
    inner: LatentMdp,
}

/// Opaque certificate handle.
pub struct BcCertificate {
    inner: CertificateReport,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> BcStatus {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) | Error::UnknownEnv(_) | Error::ShapeMismatch { .. } => {
            BcStatus::InvalidArgument
        }
        Error::Parse(_) | Error::Json(_) => BcStatus::Parse,
        Error::UnsupportedPair { .. } => BcStatus::UnsupportedPair,
        Error::InsufficientSamples { .. } => BcStatus::InsufficientSamples,
        Error::Io(_) => BcStatus::Io,
        _ => BcStatus::Other,
    }
}

/// Runs `f`, recording errors and panics for [`bc_last_error_message`].
fn guard(f: impl FnOnce() -> Result<(), (BcStatus, String)>) -> BcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            BcStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            BcStatus::Panic
        }
    }
}

fn lift(e: Error) -> (BcStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (BcStatus, String) {
    (BcStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `p` must be null or a valid nul-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (BcStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (BcStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

fn to_c_string(s: String) -> Result<*mut c_char, (BcStatus, String)> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| (BcStatus::Other, "string contains a nul byte".to_string()))
}

/// Error message of the most recent call on this thread; empty after a
/// success. The pointer stays valid until the next call on the thread.
#[no_mangle]
pub extern "C" fn bc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static version string of the library.
#[no_mangle]
pub extern "C" fn bc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Steps needed for both loss estimates to be epsilon-accurate with
/// probability at least `1 - delta`.
///
/// # Safety
/// `out` must be null or point to writable memory for a `uint64_t`.
#[no_mangle]
pub unsafe extern "C" fn bc_required_samples_loss(epsilon: f64, delta: f64, out: *mut u64) -> BcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = PacParams { epsilon, delta, gamma: 0.0 };
        *out = required_samples_loss(&p).map_err(lift)?;
        Ok(())
    })
}

/// Steps needed for the value-difference guarantee.
///
/// # Safety
/// `out` must be null or point to writable memory for a `uint64_t`.
#[no_mangle]
pub unsafe extern "C" fn bc_required_samples_value(
    epsilon: f64,
    delta: f64,
    gamma: f64,
    kv: f64,
    out: *mut u64,
) -> BcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let p = PacParams { epsilon, delta, gamma };
        *out = required_samples_value(&p, kv).map_err(lift)?;
        Ok(())
    })
}

/// Parses a latent MDP from its JSON form.
///
/// # Safety
/// `json` must be a valid nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bc_latent_mdp_from_json(json: *const c_char, out: *mut *mut BcLatentMdp) -> BcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let text = str_arg(json, "json")?;
        let inner = LatentMdp::from_json(text).map_err(lift)?;
        *out = Box::into_raw(Box::new(BcLatentMdp { inner }));
        Ok(())
    })
}

/// Releases a handle from [`bc_latent_mdp_from_json`]. Null is ignored.
///
/// # Safety
/// `mdp` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bc_latent_mdp_free(mdp: *mut BcLatentMdp) {
    if !mdp.is_null() {
        drop(Box::from_raw(mdp));
    }
}

/// Number of instantiated latent states.
///
/// # Safety
/// `mdp` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bc_latent_mdp_num_states(mdp: *const BcLatentMdp, out: *mut usize) -> BcStatus {
    guard(|| {
        let m = mdp.as_ref().ok_or_else(|| null("mdp"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.inner.states().len();
        Ok(())
    })
}

fn parse_policy(m: &LatentMdp, json: Option<&str>) -> Result<LatentPolicy, (BcStatus, String)> {
    match json {
        Some(text) => serde_json::from_str(text).map_err(|e| (BcStatus::Parse, e.to_string())),
        None => {
            let u = vec![1.0 / m.n_actions as f64; m.n_actions];
            Ok(LatentPolicy { n_actions: m.n_actions, table: m.states().into_iter().map(|s| (s, u.clone())).collect() })
        }
    }
}

/// Lipschitz constants of the chain induced by a policy. A null policy
/// means uniform over actions.
///
/// # Safety
/// `mdp` must be a live handle, `policy_json` null or a valid string, and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bc_lipschitz(
    mdp: *const BcLatentMdp,
    policy_json: *const c_char,
    gamma: f64,
    out: *mut BcLipschitz,
) -> BcStatus {
    guard(|| {
        let m = mdp.as_ref().ok_or_else(|| null("mdp"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let policy_text = if policy_json.is_null() { None } else { Some(str_arg(policy_json, "policy_json")?) };
        let policy = parse_policy(&m.inner, policy_text)?;
        let mc = LatentMc::induced(&m.inner, &policy).map_err(lift)?;
        let c = lipschitz_constants(&mc, gamma).map_err(lift)?;
        *out = BcLipschitz { kr: c.kr, kp: c.kp, kv: c.kv, rmax: c.rmax };
        Ok(())
    })
}

/// Assembles a certificate from loss estimates over `t` transitions.
///
/// # Safety
/// `constants` must point to a valid [`BcLipschitz`] and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn bc_assemble_certificate(
    lr: f64,
    lp: f64,
    t: u64,
    epsilon: f64,
    delta: f64,
    gamma: f64,
    constants: *const BcLipschitz,
    out: *mut *mut BcCertificate,
) -> BcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let c = constants.as_ref().ok_or_else(|| null("constants"))?;
        let params = PacParams::new(epsilon, delta, gamma).map_err(lift)?;
        let est = LossEstimate { lr, lp, t_used: t, params, unsupported_steps: 0 };
        let consts = LipschitzConstants {
            kr: c.kr,
            kp: c.kp,
            kv: c.kv,
            rmax: c.rmax,
            kr_pair: None,
            kp_pair: None,
            warnings: Vec::new(),
        };
        let inner = assemble_certificate(&est, &consts, BTreeMap::new()).map_err(lift)?;
        *out = Box::into_raw(Box::new(BcCertificate { inner }));
        Ok(())
    })
}

/// Releases a certificate handle. Null is ignored.
///
/// # Safety
/// `cert` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bc_certificate_free(cert: *mut BcCertificate) {
    if !cert.is_null() {
        drop(Box::from_raw(cert));
    }
}

/// JSON report of a certificate; release with [`bc_string_free`].
///
/// # Safety
/// `cert` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bc_certificate_to_json(cert: *const BcCertificate, out: *mut *mut c_char) -> BcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let c = cert.as_ref().ok_or_else(|| null("cert"))?;
        *out = to_c_string(c.inner.to_json())?;
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string returned through a `char **` argument.
#[no_mangle]
pub unsafe extern "C" fn bc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Writes the PRISM explicit files of `mdp` next to `prefix`; a non-null
/// policy adds the induced chain files.
///
/// # Safety
/// `mdp` must be a live handle, `prefix` a valid string and `policy_json`
/// null or a valid string.
#[no_mangle]
pub unsafe extern "C" fn bc_export_prism(
    mdp: *const BcLatentMdp,
    policy_json: *const c_char,
    prefix: *const c_char,
) -> BcStatus {
    guard(|| {
        let m = mdp.as_ref().ok_or_else(|| null("mdp"))?;
        let prefix = str_arg(prefix, "prefix")?;
        let policy = if policy_json.is_null() {
            None
        } else {
            Some(parse_policy(&m.inner, Some(str_arg(policy_json, "policy_json")?))?)
        };
        export_prism(&m.inner, policy.as_ref(), Path::new(prefix)).map_err(lift)?;
        Ok(())
    })
}

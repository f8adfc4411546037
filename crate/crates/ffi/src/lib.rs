//! C ABI for the innerloop engine.
//!
//! Every fallible call returns an [`IlStatus`]; on failure the message is
//! available from [`il_last_error_message`] on the same thread. Models are
//! opaque [`IlModel`] handles released with [`il_model_free`]. Output
//! buffers are caller-owned; when one is too small the call fails with
//! `IL_STATUS_BUFFER_TOO_SMALL` and reports the required length.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use innerloop::checkpoint::load_checkpoint;
use innerloop::engine::{forward, generate_greedy, score_multiple_choice, ForwardOptions};
use innerloop::model::{init_random, ModelSpec, WeightStore};
use innerloop::regularize::{RegularizerConfig, Strategy};
use innerloop::schedule::LoopSchedule;
use innerloop::tokenizer::Tokenizer;
use innerloop::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IlStatus {
    Ok = 0,
    NullArgument = 1,
    Config = 2,
    Io = 3,
    Format = 4,
    Input = 5,
    BufferTooSmall = 6,
    Internal = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IlStrategy {
    Naive = 0,
    Uniform = 1,
    MovingAverage = 2,
    AutoAlign = 3,
    Noise = 4,
}

/// Loop range `[start, end)` run `repeats` times in total, plus the
/// boundary regularizer. `align_temperature <= 0` selects `sqrt(d_model)`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct IlLoopConfig {
    pub start: usize,
    pub end: usize,
    pub repeats: usize,
    pub strategy: IlStrategy,
    pub eta: f32,
    pub align_temperature: f32,
    pub noise_seed: u64,
}

/// Model weights plus tokenizer.
pub struct IlModel {
    spec: ModelSpec,
    store: WeightStore,
    tokenizer: Tokenizer,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn status_of(err: &Error) -> IlStatus {
    match err {
        Error::Config(_) => IlStatus::Config,
        Error::Io { .. } => IlStatus::Io,
        Error::Format(_) | Error::Validation { .. } | Error::Parse { .. } => IlStatus::Format,
        _ => IlStatus::Input,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (IlStatus, String)>) -> IlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => IlStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            IlStatus::Internal
        }
    }
}

fn engine<T>(r: innerloop::Result<T>) -> Result<T, (IlStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (IlStatus, String) {
    (IlStatus::NullArgument, format!("`{what}` is null"))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], (IlStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn handle<'a>(m: *const IlModel) -> Result<&'a IlModel, (IlStatus, String)> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn path<'a>(p: *const c_char, what: &str) -> Result<&'a Path, (IlStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (IlStatus::Input, format!("`{what}` is not UTF-8")))?;
    Ok(Path::new(s))
}

unsafe fn options(m: &IlModel, cfg: *const IlLoopConfig) -> Result<ForwardOptions, (IlStatus, String)> {
    let Some(c) = cfg.as_ref() else {
        return engine(ForwardOptions::baseline(&m.spec));
    };
    let schedule = engine(LoopSchedule::new(c.start, c.end, c.repeats, m.spec.n_layers))?;
    let strategy = match c.strategy {
        IlStrategy::Naive => Strategy::Naive,
        IlStrategy::Uniform => Strategy::Uniform,
        IlStrategy::MovingAverage => Strategy::MovingAverage,
        IlStrategy::AutoAlign => Strategy::AutoAlign,
        IlStrategy::Noise => Strategy::Noise,
    };
    let reg = RegularizerConfig {
        strategy,
        eta: c.eta,
        align_temperature: (c.align_temperature > 0.0).then_some(c.align_temperature),
        noise_seed: c.noise_seed,
    };
    engine(reg.validate())?;
    Ok(ForwardOptions::new(schedule, reg))
}

fn check_capacity(needed: usize, cap: usize, out_len: *mut usize) -> Result<(), (IlStatus, String)> {
    if !out_len.is_null() {
        unsafe { *out_len = needed };
    }
    if needed > cap {
        return Err((
            IlStatus::BufferTooSmall,
            format!("output needs {needed} elements, buffer holds {cap}"),
        ));
    }
    Ok(())
}

/// Message for the last failed call on this thread. Valid until the next
/// failing call on the same thread; never null.
#[no_mangle]
pub extern "C" fn il_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a `.lprn` checkpoint. `tokenizer_path` may be null for the byte
/// tokenizer.
///
/// # Safety
/// Paths must be null or valid NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn il_model_load(
    model_path: *const c_char,
    tokenizer_path: *const c_char,
    out: *mut *mut IlModel,
) -> IlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let (spec, store) = engine(load_checkpoint(path(model_path, "model_path")?))?;
        let tokenizer = if tokenizer_path.is_null() {
            Tokenizer::byte()
        } else {
            engine(Tokenizer::load(path(tokenizer_path, "tokenizer_path")?))?
        };
        *out = Box::into_raw(Box::new(IlModel {
            spec,
            store,
            tokenizer,
        }));
        Ok(())
    })
}

/// Randomly initialised toy model with the byte tokenizer.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn il_model_init_random(
    n_layers: usize,
    d_model: usize,
    vocab_size: usize,
    seed: u64,
    out: *mut *mut IlModel,
) -> IlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let spec = ModelSpec::toy(n_layers, d_model, vocab_size);
        engine(spec.validate())?;
        let store = engine(init_random(&spec, seed))?;
        *out = Box::into_raw(Box::new(IlModel {
            spec,
            store,
            tokenizer: Tokenizer::byte(),
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn il_model_free(model: *mut IlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of blocks; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn il_model_n_layers(model: *const IlModel) -> usize {
    model.as_ref().map_or(0, |m| m.spec.n_layers)
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn il_model_vocab_size(model: *const IlModel) -> usize {
    model.as_ref().map_or(0, |m| m.spec.vocab_size)
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn il_model_d_model(model: *const IlModel) -> usize {
    model.as_ref().map_or(0, |m| m.spec.d_model)
}

/// Tokenizes `text` into `out_ids`; `*out_len` receives the token count
/// even when the buffer is too small.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out_ids` must hold `cap` ids.
#[no_mangle]
pub unsafe extern "C" fn il_encode(
    model: *const IlModel,
    text: *const c_char,
    out_ids: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> IlStatus {
    guard(|| {
        let m = handle(model)?;
        if text.is_null() {
            return Err(null("text"));
        }
        let text = CStr::from_ptr(text)
            .to_str()
            .map_err(|_| (IlStatus::Input, "text is not UTF-8".to_string()))?;
        let ids = engine(m.tokenizer.encode(text))?;
        check_capacity(ids.len(), cap, out_len)?;
        if !ids.is_empty() {
            if out_ids.is_null() {
                return Err(null("out_ids"));
            }
            ptr::copy_nonoverlapping(ids.as_ptr(), out_ids, ids.len());
        }
        Ok(())
    })
}

/// Logits for the last token. `config` may be null for the plain forward.
///
/// # Safety
/// `tokens` must hold `n_tokens` ids; `out_logits` must hold `cap` floats.
#[no_mangle]
pub unsafe extern "C" fn il_forward_last_logits(
    model: *const IlModel,
    tokens: *const u32,
    n_tokens: usize,
    config: *const IlLoopConfig,
    out_logits: *mut f32,
    cap: usize,
) -> IlStatus {
    guard(|| {
        let m = handle(model)?;
        let toks = slice(tokens, n_tokens, "tokens")?;
        let opts = options(m, config)?;
        let out = engine(forward(toks, &m.store, &m.spec, &opts))?;
        let row = out.logits.row(out.logits.n_rows() - 1);
        check_capacity(row.len(), cap, ptr::null_mut())?;
        if out_logits.is_null() {
            return Err(null("out_logits"));
        }
        ptr::copy_nonoverlapping(row.as_ptr(), out_logits, row.len());
        Ok(())
    })
}

/// Length-normalized log-likelihood of each choice. Choices are packed
/// back to back in `choice_tokens`, with lengths in `choice_lens`.
///
/// # Safety
/// Arrays must hold the stated number of elements; `out_scores` must hold
/// `n_choices` doubles and `out_best` must be writable.
#[no_mangle]
pub unsafe extern "C" fn il_score_choices(
    model: *const IlModel,
    context: *const u32,
    n_context: usize,
    choice_tokens: *const u32,
    choice_lens: *const usize,
    n_choices: usize,
    config: *const IlLoopConfig,
    out_scores: *mut f64,
    out_best: *mut usize,
) -> IlStatus {
    guard(|| {
        let m = handle(model)?;
        let ctx = slice(context, n_context, "context")?;
        let lens = slice(choice_lens, n_choices, "choice_lens")?;
        let flat = slice(choice_tokens, lens.iter().sum(), "choice_tokens")?;
        let mut choices = Vec::with_capacity(n_choices);
        let mut at = 0;
        for &n in lens {
            choices.push(flat[at..at + n].to_vec());
            at += n;
        }
        let opts = options(m, config)?;
        let sc = engine(score_multiple_choice(ctx, &choices, &m.store, &m.spec, &opts))?;
        if out_scores.is_null() {
            return Err(null("out_scores"));
        }
        ptr::copy_nonoverlapping(sc.scores.as_ptr(), out_scores, sc.scores.len());
        if !out_best.is_null() {
            *out_best = sc.best;
        }
        Ok(())
    })
}

/// Greedy decoding of up to `max_new` tokens, stopping before the
/// tokenizer's EOS.
///
/// # Safety
/// `prompt` must hold `n_prompt` ids; `out_tokens` must hold `cap` ids.
#[no_mangle]
pub unsafe extern "C" fn il_generate(
    model: *const IlModel,
    prompt: *const u32,
    n_prompt: usize,
    config: *const IlLoopConfig,
    max_new: usize,
    out_tokens: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> IlStatus {
    guard(|| {
        let m = handle(model)?;
        let toks = slice(prompt, n_prompt, "prompt")?;
        let opts = options(m, config)?;
        let eos = m.tokenizer.special().eos;
        let new = engine(generate_greedy(toks, &m.store, &m.spec, &opts, max_new, eos))?;
        check_capacity(new.len(), cap, out_len)?;
        if !new.is_empty() {
            if out_tokens.is_null() {
                return Err(null("out_tokens"));
            }
            ptr::copy_nonoverlapping(new.as_ptr(), out_tokens, new.len());
        }
        Ok(())
    })
}

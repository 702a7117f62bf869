use compose_probe_align::AlignError;
use compose_probe_core::biscor::BiscorError;
use compose_probe_core::embedding::EmbedError;
use compose_probe_core::eval::EvalError;

pub const USAGE: u8 = 2;
pub const RUNTIME: u8 = 3;
pub const DATA: u8 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self { code, error: error.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(USAGE, anyhow::anyhow!(message.into()))
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self::new(RUNTIME, anyhow::anyhow!(message.into()))
    }
}

pub type Outcome<T = ()> = Result<T, Failure>;

pub trait OrExit<T> {
    fn or_exit(self, code: u8) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> OrExit<T> for Result<T, E> {
    fn or_exit(self, code: u8) -> Outcome<T> {
        self.map_err(|e| Failure::new(code, e))
    }
}

pub fn embed_code(e: &EmbedError) -> u8 {
    match e {
        EmbedError::Format(_)
        | EmbedError::Corrupt(_)
        | EmbedError::DuplicateKey(_)
        | EmbedError::Shape { .. }
        | EmbedError::NonFinite(_)
        | EmbedError::NotNormalized { .. }
        | EmbedError::DimMismatch { .. }
        | EmbedError::GlobalRows { .. } => DATA,
        _ => RUNTIME,
    }
}

pub fn eval_code(e: &EvalError) -> u8 {
    match e {
        EvalError::Format { .. } => DATA,
        _ => RUNTIME,
    }
}

pub fn biscor_code(e: &BiscorError) -> u8 {
    match e {
        BiscorError::Parse { .. } | BiscorError::Template(_) | BiscorError::Consistency { .. } | BiscorError::MixedSplits => {
            DATA
        }
        BiscorError::ZeroCount => USAGE,
        _ => RUNTIME,
    }
}

pub fn align_code(e: &AlignError) -> u8 {
    match e {
        AlignError::Config(_) => USAGE,
        AlignError::Format(_) => DATA,
        AlignError::Embed(inner) => embed_code(inner),
        _ => RUNTIME,
    }
}

impl From<EmbedError> for Failure {
    fn from(e: EmbedError) -> Self {
        Self::new(embed_code(&e), e)
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        Self::new(eval_code(&e), e)
    }
}

impl From<BiscorError> for Failure {
    fn from(e: BiscorError) -> Self {
        Self::new(biscor_code(&e), e)
    }
}

impl From<AlignError> for Failure {
    fn from(e: AlignError) -> Self {
        Self::new(align_code(&e), e)
    }
}

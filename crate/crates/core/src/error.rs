use thiserror::Error;

/// Errors surfaced by the geometry kernel.
#[derive(Debug, Error)]
pub enum GeomError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),

    #[error("point at infinity: lift has vanishing pairing with the chart infinity")]
    PointAtInfinity,

    #[error("degenerate null pair: pairing {0:e} too close to zero")]
    DegenerateNullPair(f64),

    #[error("gauge factor must be non-zero")]
    ZeroGaugeFactor,

    #[error("vector expected null: |(v,v)| = {0:e} exceeds tolerance")]
    NotNull(f64),

    #[error("non-finite component in input")]
    NonFinite,

    #[error("grid too small: need at least {need} samples, got {got}")]
    GridTooSmall { need: usize, got: usize },

    #[error("grid spacing not uniform")]
    NonUniformGrid,

    #[error("profile not conformally parametrizable at given grid: |phi'| >= 1 at v = {0}")]
    ProfileTooSteep(f64),

    #[error("surface not immersed at node ({0}, {1})")]
    NotImmersed(usize, usize),

    #[error("totally umbilic patch: eta not canonically determined")]
    TotallyUmbilic,

    #[error("unsupported codimension: scalar curvature data requires n = 3, got n = {0}")]
    UnsupportedCodimension(usize),

    #[error("patch is not a generalised H-surface: mean curvature spread {0:e}")]
    NotCmc(f64),

    #[error("eta not closed enough to integrate: residual {residual:e} exceeds {limit:e}")]
    EtaNotClosed { residual: f64, limit: f64 },

    #[error("transform degenerates: target line meets the source line ({bad} bad nodes)")]
    TransformDegenerate { bad: usize },

    #[error("seed for a Darboux transform must be null and off the surface line")]
    BadSeed,

    #[error("spectral parameter must be non-zero")]
    ZeroSpectralParameter,

    #[error("conserved-quantity hypothesis fails: {0}")]
    HypothesisFails(String),

    #[error("root {0} is not a repeated root of the spectral polynomial")]
    NotRepeatedRoot(f64),

    #[error("sphere congruence rank/signature failure at node ({0}, {1})")]
    SignatureFailure(usize, usize),

    #[error("w lies in the congruence at {0} node(s); sphere-planes undefined there")]
    WInsideCongruence(usize),

    #[error("spectral polynomial has no usable real non-zero root")]
    NoRealRoot,

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, GeomError>;

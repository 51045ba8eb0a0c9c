use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("non-finite vector field value (input norm {norm:e})")]
    Overflow { norm: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("blowup detected at t = {time} (Z1 norm {norm:e})")]
    Blowup { time: f64, norm: f64 },

    #[error("particle {index} blew up at t = {time}")]
    ParticleBlowup { index: usize, time: f64 },

    #[error(
        "ball conditioning infeasible: pilot acceptance {acceptance:e} < 1e-3; \
         use a smaller spectral amplitude or a larger radius"
    )]
    InfeasibleConditioning { acceptance: f64 },

    #[error("CFL condition cannot be met within {substeps} sub-steps (required dt {required:e})")]
    Cfl { substeps: usize, required: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

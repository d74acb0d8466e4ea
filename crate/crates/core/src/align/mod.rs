//! Representation alignment: the time alignment module that upsamples `h`
//! to a target frame rate, a frozen surrogate ASR encoder supplying the
//! semantic target, and the cosine alignment loss.

mod loss;
mod surrogate;
mod tam;

pub use loss::{align_loss, cosine_rows_loss, mel_target_loss, AlignLoss};
pub use surrogate::{SurrogateAsrDims, SurrogateAsrEncoder};
pub use tam::{Tam, TamConfig};

use serde::{Deserialize, Serialize};

/// Which representation `h` is pulled toward during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignTarget {
    Asr,
    Mel,
    None,
}

impl std::str::FromStr for AlignTarget {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "asr" => Ok(Self::Asr),
            "mel" => Ok(Self::Mel),
            "none" => Ok(Self::None),
            other => Err(crate::Error::InvalidArgument(format!("unknown align target {other:?}"))),
        }
    }
}

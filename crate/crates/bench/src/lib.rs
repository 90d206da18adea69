//! Shared fixtures for the benchmarks.

use invrise_core::classifier::{Architecture, ConvScorer};
use invrise_core::dataset::{generate_instance, ClassSpec, DefectKind, LabeledInstance};

/// A NOK seam image of the given side.
pub fn nok_instance(side: usize) -> LabeledInstance {
    generate_instance(17, ClassSpec::Nok(DefectKind::Pore), side, 1)
}

/// An untrained scorer; timing does not depend on the weights.
pub fn scorer(input_side: usize) -> ConvScorer {
    ConvScorer::new(
        Architecture {
            input_side,
            ..Architecture::default()
        },
        3,
    )
    .expect("valid architecture")
}

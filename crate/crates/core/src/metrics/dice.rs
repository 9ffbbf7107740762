use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{ClassMask, FOREGROUND};

/// Dice overlap of the class-`c` indicator sets of two masks; 1 when both are empty.
pub fn dice(a: &ClassMask, b: &ClassMask, class: u8) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "cannot compare masks {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (ia, ib) = (x == class, y == class);
        na += ia as usize;
        nb += ib as usize;
        inter += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Per-structure Dice for the three foreground classes and their mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceVector {
    pub per_class: [f64; 3],
    pub mean: f64,
}

impl DiceVector {
    pub fn between(prediction: &ClassMask, reference: &ClassMask) -> Result<Self> {
        let mut per_class = [0.0; 3];
        for (slot, &c) in per_class.iter_mut().zip(&FOREGROUND) {
            *slot = dice(prediction, reference, c)?;
        }
        Ok(DiceVector {
            per_class,
            mean: per_class.iter().sum::<f64>() / 3.0,
        })
    }

    /// The four reported columns: LV, LVM, LA, foreground mean.
    pub fn columns(&self) -> [f64; 4] {
        [self.per_class[0], self.per_class[1], self.per_class[2], self.mean]
    }
}

/// Unweighted foreground mean Dice (classes 1–3).
pub fn foreground_dice(prediction: &ClassMask, reference: &ClassMask) -> Result<f64> {
    Ok(DiceVector::between(prediction, reference)?.mean)
}

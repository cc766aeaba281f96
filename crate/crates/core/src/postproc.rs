//! Lesion clean-up: minimum physical area and liver-mask refinement.

use std::collections::VecDeque;

use ndarray::{Array2, Zip};

use crate::domain::{ClassId, LabelMap, PixelSpacing};
use crate::error::{Error, Result};

/// 1 cm².
pub const MIN_LESION_AREA_MM2: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentStats {
    pub id: usize,
    pub class: ClassId,
    pub area_px: usize,
    pub area_mm2: f64,
}

/// 8-connected components of pixels equal to `class`. Component ids start
/// at 1; 0 marks pixels of other classes.
pub fn label_components(labels: &LabelMap, class: ClassId) -> (Array2<usize>, Vec<usize>) {
    let codes = labels.codes();
    let (h, w) = codes.dim();
    let target = class.code();
    let mut ids = Array2::<usize>::zeros((h, w));
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if codes[[y, x]] != target || ids[[y, x]] != 0 {
                continue;
            }
            let id = sizes.len() + 1;
            let mut size = 0;
            ids[[y, x]] = id;
            queue.push_back((y, x));
            while let Some((cy, cx)) = queue.pop_front() {
                size += 1;
                for ny in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
                    for nx in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                        if codes[[ny, nx]] == target && ids[[ny, nx]] == 0 {
                            ids[[ny, nx]] = id;
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
            sizes.push(size);
        }
    }
    (ids, sizes)
}

/// Connected lesion components of every lesion class with their physical areas.
pub fn lesion_components(labels: &LabelMap, spacing: PixelSpacing) -> Vec<ComponentStats> {
    let mut out = Vec::new();
    for class in ClassId::LESIONS {
        let (_, sizes) = label_components(labels, class);
        for (i, area_px) in sizes.into_iter().enumerate() {
            out.push(ComponentStats {
                id: i + 1,
                class,
                area_px,
                area_mm2: area_px as f64 * spacing.pixel_area_mm2(),
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaFilter {
    pub min_area_mm2: f64,
    /// Class given to pixels of removed components.
    pub replacement: ClassId,
}

impl Default for AreaFilter {
    fn default() -> Self {
        Self {
            min_area_mm2: MIN_LESION_AREA_MM2,
            replacement: ClassId::Liver,
        }
    }
}

impl AreaFilter {
    /// Relabels every lesion component with `area_px * sx * sy < min_area_mm2`.
    pub fn apply(&self, labels: &LabelMap, spacing: PixelSpacing) -> LabelMap {
        let mut codes = labels.codes().clone();
        let px_area = spacing.pixel_area_mm2();
        for class in ClassId::LESIONS {
            let (ids, sizes) = label_components(labels, class);
            let remove: Vec<bool> = sizes
                .iter()
                .map(|&n| (n as f64) * px_area < self.min_area_mm2)
                .collect();
            if !remove.iter().any(|&r| r) {
                continue;
            }
            Zip::from(&mut codes).and(&ids).for_each(|c, &id| {
                if id > 0 && remove[id - 1] {
                    *c = self.replacement.code();
                }
            });
        }
        LabelMap::new(codes).expect("only valid codes written")
    }
}

/// [`AreaFilter`] with the 1 cm² threshold, removed lesions becoming liver.
pub fn area_filter(labels: &LabelMap, spacing: PixelSpacing) -> LabelMap {
    AreaFilter::default().apply(labels, spacing)
}

/// Sets every non-background pixel outside `liver_mask` to background.
pub fn liver_refine(labels: &LabelMap, liver_mask: &Array2<bool>) -> Result<LabelMap> {
    if labels.dim() != liver_mask.dim() {
        return Err(Error::ShapeMismatch {
            expected: vec![labels.dim().0, labels.dim().1],
            actual: liver_mask.shape().to_vec(),
        });
    }
    let mut codes = labels.codes().clone();
    Zip::from(&mut codes).and(liver_mask).for_each(|c, &inside| {
        if !inside {
            *c = ClassId::Background.code();
        }
    });
    Ok(LabelMap::new(codes).expect("only valid codes written"))
}

use super::PatchCandidate;

/// Greedy non-maximum suppression by descending energy. A candidate is
/// dropped when its box overlaps an already kept box with IoU above
/// `iou_threshold`. Equal energies keep their input order.
pub fn nms_select(candidates: &[PatchCandidate], iou_threshold: f64, max_keep: usize) -> Vec<PatchCandidate> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].energy.total_cmp(&candidates[a].energy));
    let mut kept: Vec<PatchCandidate> = Vec::with_capacity(max_keep.min(candidates.len()));
    for i in order {
        if kept.len() >= max_keep {
            break;
        }
        let c = &candidates[i];
        if kept.iter().all(|k| k.bbox.iou(&c.bbox) <= iou_threshold) {
            kept.push(c.clone());
        }
    }
    kept
}

use crate::tokenspace::{Token, TokenRole};

/// Bookkeeping for one cached token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowMeta {
    pub position: u64,
    pub token: Token,
}

impl RowMeta {
    pub fn role(&self) -> &TokenRole {
        &self.token.role
    }
}

/// A cached token lifted out of a [`KvCache`], with its key/value vectors for every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KvRow {
    pub meta: RowMeta,
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CostCounter {
    pub prefill_tokens: u64,
    pub decode_tokens: u64,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct LayerKv {
    pub(crate) keys: Vec<f64>,
    pub(crate) values: Vec<f64>,
}

/// Per-layer key/value store. Rows are kept in append order; positions are
/// assigned once at encode time and never rewritten.
#[derive(Debug, Clone)]
pub struct KvCache {
    width: usize,
    pub(crate) meta: Vec<RowMeta>,
    pub(crate) layers: Vec<LayerKv>,
    next_position: u64,
    pub cost: CostCounter,
}

impl KvCache {
    pub fn new(layers: usize, width: usize) -> Self {
        KvCache {
            width,
            meta: Vec::new(),
            layers: vec![LayerKv::default(); layers],
            next_position: 0,
            cost: CostCounter::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rows(&self) -> &[RowMeta] {
        &self.meta
    }

    /// Position the next appended token receives.
    pub fn next_position(&self) -> u64 {
        self.next_position
    }

    pub fn key(&self, layer: usize, row: usize) -> &[f64] {
        &self.layers[layer].keys[row * self.width..(row + 1) * self.width]
    }

    pub fn value(&self, layer: usize, row: usize) -> &[f64] {
        &self.layers[layer].values[row * self.width..(row + 1) * self.width]
    }

    pub(crate) fn push_meta(&mut self, meta: RowMeta) {
        debug_assert!(meta.position >= self.next_position);
        self.next_position = meta.position + 1;
        self.meta.push(meta);
    }

    pub fn count_role(&self, pred: impl Fn(&TokenRole) -> bool) -> usize {
        self.meta.iter().filter(|m| pred(&m.token.role)).count()
    }

    /// Removes every row failing `keep`, identically in all layers.
    pub fn evict(&mut self, mut keep: impl FnMut(&RowMeta) -> bool) {
        let flags: Vec<bool> = self.meta.iter().map(&mut keep).collect();
        if flags.iter().all(|&k| k) {
            return;
        }
        let w = self.width;
        for layer in &mut self.layers {
            let mut dst = 0;
            for (src, &k) in flags.iter().enumerate() {
                if k {
                    if src != dst {
                        layer.keys.copy_within(src * w..(src + 1) * w, dst * w);
                        layer.values.copy_within(src * w..(src + 1) * w, dst * w);
                    }
                    dst += 1;
                }
            }
            layer.keys.truncate(dst * w);
            layer.values.truncate(dst * w);
        }
        let mut it = flags.iter();
        self.meta.retain(|_| *it.next().unwrap());
    }

    /// Removes and returns the rows matching `take`, in cache order.
    pub fn take_rows(&mut self, mut take: impl FnMut(&RowMeta) -> bool) -> Vec<KvRow> {
        let flags: Vec<bool> = self.meta.iter().map(&mut take).collect();
        let taken = flags
            .iter()
            .enumerate()
            .filter(|(_, &t)| t)
            .map(|(i, _)| self.row(i))
            .collect();
        let mut it = flags.iter();
        self.evict(|_| !*it.next().unwrap());
        taken
    }

    pub fn row(&self, i: usize) -> KvRow {
        KvRow {
            meta: self.meta[i],
            keys: (0..self.layers.len()).map(|l| self.key(l, i).to_vec()).collect(),
            values: (0..self.layers.len()).map(|l| self.value(l, i).to_vec()).collect(),
        }
    }

    /// Appends a previously offloaded row. Its position must follow every cached position.
    pub fn push_row(&mut self, row: &KvRow) {
        assert_eq!(row.keys.len(), self.layers.len(), "layer count mismatch");
        if let Some(last) = self.meta.last() {
            assert!(row.meta.position > last.position, "offloaded rows must be bound in position order");
        }
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.keys.extend_from_slice(&row.keys[l]);
            layer.values.extend_from_slice(&row.values[l]);
        }
        self.meta.push(row.meta);
        self.next_position = self.next_position.max(row.meta.position + 1);
    }

    /// Drops all rows; the position counter and cost counters are kept.
    pub fn clear(&mut self) {
        self.meta.clear();
        for layer in &mut self.layers {
            layer.keys.clear();
            layer.values.clear();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenspace::TokenId;

    fn filled(n: usize) -> KvCache {
        let mut c = KvCache::new(2, 3);
        for i in 0..n {
            c.push_meta(RowMeta { position: i as u64, token: Token::prompt(TokenId(i as u32)) });
            for l in 0..2 {
                let base = (i * 10 + l * 100) as f64;
                c.layers[l].keys.extend([base, base + 1.0, base + 2.0]);
                c.layers[l].values.extend([-base, -base - 1.0, -base - 2.0]);
            }
        }
        c
    }

    #[test]
    fn evict_keep_all_is_identity() {
        let mut c = filled(5);
        let before = c.clone();
        c.evict(|_| true);
        assert_eq!(c.meta, before.meta);
        assert_eq!(c.layers[1].keys, before.layers[1].keys);
    }

    #[test]
    fn evict_keep_none_empties() {
        let mut c = filled(5);
        c.evict(|_| false);
        assert!(c.is_empty());
        assert!(c.layers.iter().all(|l| l.keys.is_empty() && l.values.is_empty()));
        assert_eq!(c.next_position(), 5);
    }

    #[test]
    fn evict_preserves_positions_and_rows() {
        let mut c = filled(6);
        let kept: Vec<KvRow> = [1, 4, 5].iter().map(|&i| c.row(i)).collect();
        c.evict(|m| [1, 4, 5].contains(&m.position));
        assert_eq!(c.len(), 3);
        for (i, row) in kept.iter().enumerate() {
            assert_eq!(&c.row(i), row);
        }
    }

    #[test]
    fn take_then_push_restores_rows() {
        let mut c = filled(4);
        let rows = c.take_rows(|m| m.position >= 2);
        assert_eq!(c.len(), 2);
        assert_eq!(rows.len(), 2);
        for r in &rows {
            c.push_row(r);
        }
        assert_eq!(c.rows(), filled(4).rows());
        assert_eq!(c.layers[0].keys, filled(4).layers[0].keys);
    }

    #[test]
    #[should_panic(expected = "position order")]
    fn push_row_rejects_out_of_order() {
        let mut c = filled(4);
        let r = c.row(1);
        c.push_row(&r);
    }
}

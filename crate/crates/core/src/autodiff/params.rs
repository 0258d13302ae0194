use std::ops::Range;

use crate::error::{Error, Result};

use super::Tensor;

/// A named slice of a flat parameter vector, viewed as a `rows x cols` matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub start: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len()
    }
}

/// Segment table for a [`ParamVector`]. Segments are contiguous, disjoint and
/// cover `[0, len)` in insertion order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Layout {
    segments: Vec<Segment>,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a segment; panics on duplicate names.
    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> &mut Self {
        let name = name.into();
        assert!(
            self.segment(&name).is_none(),
            "duplicate parameter segment `{name}`"
        );
        let start = self.len();
        self.segments.push(Segment {
            name,
            start,
            rows,
            cols,
        });
        self
    }

    pub fn len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.start + s.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// Rebuilds a layout from an explicit table, validating coverage.
    pub fn from_segments(segments: Vec<Segment>) -> Result<Self> {
        let mut next = 0;
        for s in &segments {
            if s.start != next {
                return Err(Error::Format(format!(
                    "segment `{}` starts at {} but {} was expected",
                    s.name, s.start, next
                )));
            }
            next += s.len();
        }
        Ok(Self { segments })
    }
}

/// Flat parameter vector with a named-segment layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    data: Vec<f64>,
    layout: Layout,
}

impl ParamVector {
    pub fn new(layout: Layout, data: Vec<f64>) -> Result<Self> {
        if layout.len() != data.len() {
            return Err(Error::Dimension {
                expected: layout.len(),
                found: data.len(),
                context: "parameter vector".into(),
            });
        }
        Ok(Self { data, layout })
    }

    pub fn zeros(layout: Layout) -> Self {
        let data = vec![0.0; layout.len()];
        Self { data, layout }
    }

    /// Single anonymous segment covering the whole vector.
    pub fn flat(data: Vec<f64>) -> Self {
        let mut layout = Layout::new();
        layout.push("x", data.len(), 1);
        Self { data, layout }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.layout.segment(name).map(|s| &self.data[s.range()])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.segment(name)?.range();
        Some(&mut self.data[range])
    }

    /// Segment viewed as a matrix.
    pub fn tensor(&self, name: &str) -> Option<Tensor> {
        let s = self.layout.segment(name)?;
        Some(Tensor::new(s.rows, s.cols, self.data[s.range()].to_vec()))
    }

    /// Splits into one tensor per segment, in layout order.
    pub fn unpack(&self) -> Vec<(String, Tensor)> {
        self.layout
            .segments()
            .iter()
            .map(|s| {
                (
                    s.name.clone(),
                    Tensor::new(s.rows, s.cols, self.data[s.range()].to_vec()),
                )
            })
            .collect()
    }

    /// Inverse of [`ParamVector::unpack`].
    pub fn pack(parts: &[(String, Tensor)]) -> Self {
        let mut layout = Layout::new();
        let mut data = Vec::new();
        for (name, t) in parts {
            layout.push(name.clone(), t.rows(), t.cols());
            data.extend_from_slice(t.data());
        }
        Self { data, layout }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_covers_range() {
        let mut l = Layout::new();
        l.push("a", 2, 3).push("b", 4, 1);
        assert_eq!(l.len(), 10);
        assert_eq!(l.segment("b").unwrap().range(), 6..10);
        assert!(Layout::from_segments(l.segments().to_vec()).is_ok());
    }

    #[test]
    fn gap_in_table_rejected() {
        let segs = vec![Segment {
            name: "a".into(),
            start: 1,
            rows: 1,
            cols: 1,
        }];
        assert!(Layout::from_segments(segs).is_err());
    }

    #[test]
    fn wrong_length_rejected() {
        let mut l = Layout::new();
        l.push("a", 2, 2);
        assert!(ParamVector::new(l, vec![0.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn pack_unpack_identity(shapes in prop::collection::vec((1usize..4, 1usize..4), 1..5), seed in any::<u64>()) {
            let mut layout = Layout::new();
            for (i, (r, c)) in shapes.iter().enumerate() {
                layout.push(format!("s{i}"), *r, *c);
            }
            let data: Vec<f64> = (0..layout.len()).map(|i| (i as f64 + seed as f64 * 1e-9).sin()).collect();
            let p = ParamVector::new(layout, data).unwrap();
            prop_assert_eq!(ParamVector::pack(&p.unpack()), p);
        }
    }
}

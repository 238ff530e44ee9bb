use super::render::{render_face, FaceSpec, IDENTITY_DIM, NUM_EMOTIONS};
use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};

/// Rendered toy faces: one `[size·size]` row per item.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub size: usize,
    pub specs: Vec<FaceSpec>,
    /// Index of the identity each item was rendered from.
    pub identity_ids: Vec<usize>,
    pub images: Tensor,
}

impl Dataset {
    /// `identities` random identities, each rendered once per emotion class.
    pub fn generate(identities: usize, size: usize, rng: &mut RngStream) -> Result<Self> {
        if identities == 0 {
            return Err(Error::EmptyInput("dataset with zero identities".into()));
        }
        let ids: Vec<[f64; IDENTITY_DIM]> = (0..identities)
            .map(|_| std::array::from_fn(|_| 2.0 * rng.uniform() - 1.0))
            .collect();
        let mut specs = Vec::with_capacity(identities * NUM_EMOTIONS);
        let mut identity_ids = Vec::with_capacity(specs.capacity());
        for (i, id) in ids.iter().enumerate() {
            for e in 0..NUM_EMOTIONS {
                specs.push(FaceSpec::new(*id, e));
                identity_ids.push(i);
            }
        }
        Self::from_specs(specs, identity_ids, size)
    }

    pub fn from_specs(specs: Vec<FaceSpec>, identity_ids: Vec<usize>, size: usize) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::EmptyInput("dataset with no items".into()));
        }
        let mut data = Vec::with_capacity(specs.len() * size * size);
        for s in &specs {
            data.extend(render_face(s, size)?.into_data());
        }
        let images = Tensor::new(&[specs.len(), size * size], data)?;
        Ok(Self {
            size,
            specs,
            identity_ids,
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.specs.iter().map(|s| s.emotion).collect()
    }

    pub fn image(&self, i: usize) -> Tensor {
        Tensor::vector(self.images.row(i).to_vec())
    }

    pub fn class_counts(&self) -> [usize; NUM_EMOTIONS] {
        let mut c = [0; NUM_EMOTIONS];
        for s in &self.specs {
            c[s.emotion] += 1;
        }
        c
    }

    /// Items with the given indices, keeping identity bookkeeping.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            size: self.size,
            specs: idx.iter().map(|&i| self.specs[i].clone()).collect(),
            identity_ids: idx.iter().map(|&i| self.identity_ids[i]).collect(),
            images: self.images.select_rows(idx),
        }
    }

    /// Manifest line `id,p0,p1,p2,emotion,path` per item.
    pub fn manifest_lines(&self, path_of: impl Fn(usize) -> String) -> Vec<String> {
        self.specs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let p: Vec<String> = s.identity.iter().map(|v| format!("{v:.17e}")).collect();
                format!("{i},{},{},{}", p.join(","), s.emotion, path_of(i))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_deterministic() {
        let a = Dataset::generate(5, 16, &mut RngStream::new(3, 0)).unwrap();
        let b = Dataset::generate(5, 16, &mut RngStream::new(3, 0)).unwrap();
        assert_eq!(a.len(), 35);
        assert_eq!(a.class_counts(), [5; NUM_EMOTIONS]);
        assert_eq!(a.images, b.images);
        assert!(Dataset::generate(0, 16, &mut RngStream::new(3, 0)).is_err());
    }

    #[test]
    fn manifest_has_one_line_per_item() {
        let d = Dataset::generate(2, 16, &mut RngStream::new(3, 0)).unwrap();
        let lines = d.manifest_lines(|i| format!("img/{i:05}.pgm"));
        assert_eq!(lines.len(), 14);
        assert_eq!(lines[3].split(',').count(), 6);
        assert!(lines[3].ends_with(",3,img/00003.pgm"));
    }
}

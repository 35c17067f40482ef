use crate::error::{shape_err, Error, Result};

/// Integer class labels over a spatial grid (no channel axis).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelField {
    shape: Vec<usize>,
    data: Vec<u32>,
}

impl LabelField {
    pub fn new(shape: Vec<usize>, data: Vec<u32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(shape_err!("{} labels for shape {:?}", data.len(), shape));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn mask(&self, class: u32) -> Vec<bool> {
        self.data.iter().map(|&l| l == class).collect()
    }

    /// Voxel count per class `0..classes`.
    pub fn histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &l in &self.data {
            if (l as usize) < classes {
                h[l as usize] += 1;
            }
        }
        h
    }

    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.data.iter().find(|&&l| l as usize >= classes) {
            Some(bad) => Err(Error::Data(format!("label {bad} out of range for {classes} classes"))),
            None => Ok(()),
        }
    }
}

use crate::error::Result;

/// Parameters of one pre-norm transformer block.
///
/// Generic over the stored type so the same layout serves for owned weights
/// (`Tensor`), tape handles (`Var`) and gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gamma: T,
    pub ln1_beta: T,
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub ln2_gamma: T,
    pub ln2_beta: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

macro_rules! layer_fields {
    ($m:ident) => {
        $m!(ln1_gamma, ln1_beta, wq, bq, wk, bk, wv, bv, wo, bo, ln2_gamma, ln2_beta, w1, b1, w2, b2)
    };
}

impl<T> LayerParams<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        macro_rules! go {
            ($($field:ident),*) => { $( f(format!("{prefix}.{}", stringify!($field)), &self.$field); )* };
        }
        layer_fields!(go);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        macro_rules! go {
            ($($field:ident),*) => { $( f(format!("{prefix}.{}", stringify!($field)), &mut self.$field); )* };
        }
        layer_fields!(go);
    }

    pub fn try_map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> Result<U>) -> Result<LayerParams<U>> {
        macro_rules! go {
            ($($field:ident),*) => {
                LayerParams { $( $field: f(&format!("{prefix}.{}", stringify!($field)), &self.$field)?, )* }
            };
        }
        Ok(layer_fields!(go))
    }
}

/// Embedding tables, transformer blocks and the final layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub token_emb: T,
    pub position_emb: T,
    pub segment_emb: T,
    pub layers: Vec<LayerParams<T>>,
    pub final_gamma: T,
    pub final_beta: T,
}

impl<T> EncoderParams<T> {
    /// Visits every parameter in a fixed order with its dotted name.
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}token_emb"), &self.token_emb);
        f(format!("{prefix}position_emb"), &self.position_emb);
        f(format!("{prefix}segment_emb"), &self.segment_emb);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}layers.{i}"), f);
        }
        f(format!("{prefix}final_gamma"), &self.final_gamma);
        f(format!("{prefix}final_beta"), &self.final_beta);
    }

    /// Mutable counterpart of [`visit`](Self::visit); same order.
    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        f(format!("{prefix}token_emb"), &mut self.token_emb);
        f(format!("{prefix}position_emb"), &mut self.position_emb);
        f(format!("{prefix}segment_emb"), &mut self.segment_emb);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}layers.{i}"), f);
        }
        f(format!("{prefix}final_gamma"), &mut self.final_gamma);
        f(format!("{prefix}final_beta"), &mut self.final_beta);
    }

    pub fn try_map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> Result<U>) -> Result<EncoderParams<U>> {
        Ok(EncoderParams {
            token_emb: f(&format!("{prefix}token_emb"), &self.token_emb)?,
            position_emb: f(&format!("{prefix}position_emb"), &self.position_emb)?,
            segment_emb: f(&format!("{prefix}segment_emb"), &self.segment_emb)?,
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.try_map(&format!("{prefix}layers.{i}"), f))
                .collect::<Result<_>>()?,
            final_gamma: f(&format!("{prefix}final_gamma"), &self.final_gamma)?,
            final_beta: f(&format!("{prefix}final_beta"), &self.final_beta)?,
        })
    }

    pub fn count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _| n += 1);
        n
    }
}

pub(crate) mod attention;
pub(crate) mod conv;
pub(crate) mod elementwise;
pub(crate) mod norm;
pub(crate) mod structural;

pub(crate) use elementwise::sigmoid_scalar;

use pyo3::prelude::*;

#[pymodule]
fn videovae_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}

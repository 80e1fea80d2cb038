use pyo3::prelude::*;

#[pymodule]
fn symleg_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}

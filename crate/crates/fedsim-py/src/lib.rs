use pyo3::prelude::*;

#[pymodule]
fn fedsim_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}

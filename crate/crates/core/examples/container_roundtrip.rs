//! Writes a small tensor container to a temporary directory and reads it back.

use ndarray::{ArrayD, IxDyn};
use neuronscope::container::TensorMap;

fn main() -> neuronscope::Result<()> {
    let mut map = TensorMap::new();
    let grid = ArrayD::from_shape_fn(IxDyn(&[2, 3]), |ix| (ix[0] * 3 + ix[1]) as f32);
    map.insert("demo.grid", grid.clone());
    map.insert_text("demo.names", vec!["alpha".into(), "beta".into()]);

    let dir = std::env::temp_dir().join(format!("neuronscope-container-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    map.write(&dir)?;
    let back = TensorMap::read(&dir)?;
    assert_eq!(back.get("demo.grid")?, &grid);
    println!("grid {:?}", back.get("demo.grid")?.shape());
    println!("names {:?}", back.text("demo.names")?);
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}

//! Build a small event stream by hand and turn it into a voxel grid.
//!
//! Each event splits its polarity across the two nearest time bins by
//! linear interpolation, so the grid total always matches the signed
//! polarity sum no matter where the timestamps fall.

use evidepth::events::{Event, EventStream};

fn main() -> evidepth::Result<()> {
    let events = vec![
        Event::new(1, 1, 0, 1),
        Event::new(2, 1, 2_500, 1),
        Event::new(2, 2, 5_000, -1),
        Event::new(3, 2, 7_500, -1),
        Event::new(3, 3, 10_000, 1),
    ];
    let stream = EventStream::new(events, (4, 4))?;
    let grid = stream.voxelize(3)?;

    println!("sensor {:?}, {} bins", grid.sensor_size(), grid.bins());
    for (b, plane) in grid.data.outer_iter().enumerate() {
        println!("bin {b}: mass {:+.3}", plane.sum());
    }
    let signed: f64 = stream.events().iter().map(|e| e.p as f64).sum();
    println!("grid total {:+.3} vs polarity sum {signed:+.3}", grid.total());

    let trailing = stream.voxelize_window(3, 5_000, 10_000)?;
    println!(
        "trailing half only: total {:+.3} (events before t=5000 dropped)",
        trailing.total()
    );
    Ok(())
}

//! Build interface-fitted meshes for several lens shapes and report their
//! quality: element counts, minimum angles, interface resolution, and the
//! admissibility margins the deformation step relies on.
//!
//! Run with `cargo run --example mesh_quality`.

use lensopt::geometry::{build_mesh, check_admissible, Domain, LensShape};

fn main() {
    let domain = Domain { min: [0.0, 0.0], max: [1.0, 1.0] };
    let shapes: Vec<(&str, LensShape)> = vec![
        ("circle r = 0.2", LensShape::Circle { center: [0.5, 0.5], radius: 0.2 }),
        (
            "ellipse 0.25 × 0.15",
            LensShape::Ellipse { center: [0.5, 0.5], semi_axes: [0.25, 0.15] },
        ),
        (
            "kite quadrilateral",
            LensShape::Polygon {
                vertices: vec![[0.5, 0.72], [0.3, 0.5], [0.5, 0.35], [0.7, 0.5]],
            },
        ),
    ];

    for h in [1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0] {
        println!("mesh size {h}");
        for (name, shape) in &shapes {
            let mesh = build_mesh(domain, shape, h).expect("the shapes fit the unit square");
            let report = check_admissible(&mesh);
            let lens_elements = mesh.labels.iter().filter(|l| l.is_lens()).count();
            println!(
                "  {name:22} {:5} nodes, {:5} elements ({lens_elements:4} lens), \
                 {:3} interface edges",
                mesh.n_nodes(),
                mesh.elements.len(),
                mesh.interface_edges.len(),
            );
            println!(
                "  {:22} min area {:.3e}, max turning angle {:.1}°, clearance {:.3}",
                "",
                report.min_element_area,
                report.max_turning_angle_deg,
                report.boundary_clearance,
            );
            assert!(report.admissible, "every built mesh must start admissible");
        }
        println!();
    }
}
